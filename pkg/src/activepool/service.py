"""HTTP labeling service: publish query batches, collect labels, advance rounds.

External oracles (humans or scripts) drive the acquisition loop over a
small JSON API. Every accepted mutation is appended to a per-experiment
journal and fsynced before the acknowledgement leaves the process, so a
crash at any point replays to the exact pre-crash pool and batch state.

Endpoints:
    GET  /v1/experiments/{id}/batch        open batch (created on first read)
    POST /v1/labels                        submit one label
    POST /v1/experiments/{id}/batch/close  apply labels, advance the round
    GET  /v1/experiments/{id}/status       progress report
    GET  /v1/experiments/{id}/snapshot     canonical pool+batch snapshot
"""

from __future__ import annotations

import base64
import json
import re
import struct
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ContractViolation
from .harness import (
    ExperimentConfig,
    StrategyBundle,
    _select,
    _train_round_models,
    budget_size,
    test_accuracy,
    validate_schedule,
)
from .pool import Dataset, OracleConfig, PoolState, annotate, init_pools, pool_snapshot
from .rng import spawn_seeds

_JOURNAL_MAGIC = b"ALPOOLJL"
_JOURNAL_VERSION = 1


class ServiceError(Exception):
    """HTTP-mapped failure."""

    def __init__(self, status: int, message: str, **extra):
        super().__init__(message)
        self.status = status
        self.payload = {"error": message, **extra}


class Journal:
    """Append-only journal of length-prefixed JSON records."""

    def __init__(self, path, experiment_id: str):
        self.path = Path(path)
        self.experiment_id = experiment_id
        self._fh = None

    def open(self) -> list[dict]:
        """Open (creating if needed) and return all intact records."""
        records = []
        if self.path.exists():
            records = self._read_existing()
            self._fh = open(self.path, "ab")
        else:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "ab")
            header = self.experiment_id.encode()
            self._fh.write(_JOURNAL_MAGIC)
            self._fh.write(struct.pack("<II", _JOURNAL_VERSION, len(header)))
            self._fh.write(header)
            self._fh.flush()
        return records

    def _read_existing(self) -> list[dict]:
        raw = self.path.read_bytes()
        if raw[: len(_JOURNAL_MAGIC)] != _JOURNAL_MAGIC:
            raise ConfigurationError(f"{self.path}: not a journal file")
        version, id_len = struct.unpack_from("<II", raw, len(_JOURNAL_MAGIC))
        if version != _JOURNAL_VERSION:
            raise ConfigurationError(f"{self.path}: unsupported journal version {version}")
        offset = len(_JOURNAL_MAGIC) + 8 + id_len
        records = []
        while offset + 4 <= len(raw):
            (length,) = struct.unpack_from("<I", raw, offset)
            if offset + 4 + length > len(raw):
                break  # torn tail from a crash mid-write
            try:
                records.append(json.loads(raw[offset + 4:offset + 4 + length]))
            except json.JSONDecodeError:
                break
            offset += 4 + length
        return records

    def append(self, record: dict) -> None:
        """Durably append one record (fsync before returning)."""
        blob = json.dumps(record, sort_keys=True).encode()
        self._fh.write(struct.pack("<I", len(blob)) + blob)
        self._fh.flush()
        import os

        os.fsync(self._fh.fileno())

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None


@dataclass
class OpenBatch:
    batch_id: str
    round: int
    indices: tuple[int, ...]
    created_at: float
    labels: dict[int, int] = field(default_factory=dict)
    annotators: dict[int, str] = field(default_factory=dict)

    @property
    def completion(self) -> float:
        return len(self.labels) / len(self.indices)


class ExperimentRuntime:
    """Single-writer state machine for one experiment behind the API."""

    def __init__(self, experiment_id: str, cfg: ExperimentConfig, dataset: Dataset, data_dir):
        self.id = experiment_id
        self.cfg = cfg
        self.dataset = dataset
        self.lock = threading.Lock()
        self.journal = Journal(Path(data_dir) / f"{experiment_id}.journal", experiment_id)
        self.pool: PoolState = init_pools(dataset, cfg.initial_fraction, cfg.bias, seed=cfg.seed)
        self.batch: OpenBatch | None = None
        self.seq = 0
        self.last_metrics: dict | None = None
        self._bundle: StrategyBundle | None = None
        self._projection = self._fit_projection()
        validate_schedule(cfg, dataset)
        for record in self.journal.open():
            self._apply(record, replay=True)

    # -- projection for human-readable previews -------------------------

    def _fit_projection(self):
        x = self.dataset.features
        center = x.mean(axis=0)
        if x.shape[1] <= 2:
            pad = np.zeros((x.shape[1], 2))
            pad[: min(2, x.shape[1]), :2] = np.eye(min(2, x.shape[1]), 2)
            return center, pad
        _, _, vt = np.linalg.svd(x - center, full_matrices=False)
        return center, vt[:2].T

    def _preview(self, index: int) -> list[float]:
        center, basis = self._projection
        coords = (self.dataset.features[index] - center) @ basis
        return [round(float(c), 6) for c in coords]

    # -- state transitions ------------------------------------------------

    def _apply(self, record: dict, replay: bool = False) -> None:
        kind = record["type"]
        if kind == "batch_open":
            self.batch = OpenBatch(
                batch_id=record["batch_id"],
                round=record["round"],
                indices=tuple(record["indices"]),
                created_at=record["created_at"],
            )
        elif kind == "label":
            self.batch.labels[int(record["index"])] = int(record["class"])
            self.batch.annotators[int(record["index"])] = record.get("annotator", "")
        elif kind == "batch_close":
            labels = dict(self.batch.labels)
            self.pool = annotate(self.pool, list(self.batch.indices),
                                 OracleConfig(kind="external"), self.dataset, labels=labels)
            self.batch = None
            self._bundle = None
        else:
            raise ConfigurationError(f"unknown journal record type {kind!r}")
        self.seq += 1

    @property
    def max_labeled(self) -> int:
        n = len(self.dataset.train_indices)
        return int(round(self.cfg.target_fractions[-1] * n))

    @property
    def terminal(self) -> bool:
        return len(self.pool.labeled) >= self.max_labeled

    def open_batch(self) -> OpenBatch:
        """Train for the current round, select a batch, and publish it."""
        with self.lock:
            if self.batch is not None:
                raise ServiceError(409, "a batch is already open", batch_id=self.batch.batch_id)
            return self._open_locked()

    def get_or_open_batch(self) -> OpenBatch:
        """Idempotent read: returns the open batch, creating one if absent."""
        with self.lock:
            if self.batch is not None:
                return self.batch
            return self._open_locked()

    def _open_locked(self) -> OpenBatch:
        if self.terminal:
            raise ServiceError(409, "experiment reached its final labeled fraction")
        ablation = self.cfg.ablation[0] if self.cfg.ablation else None
        round_seed = spawn_seeds(self.cfg.seed, 1, "round-models", self.pool.round)[0]
        bundle = _train_round_models(self.cfg, self.dataset, self.pool, round_seed, ablation)
        self._bundle = bundle
        self.last_metrics = {"test_accuracy": test_accuracy(bundle.models.task, self.dataset),
                             "round": self.pool.round}
        b = budget_size(self.cfg, self.dataset)
        acquire_seed = spawn_seeds(self.cfg.seed, 1, "acquire", self.pool.round)[0]
        result = _select(self.cfg, self.dataset, self.pool, bundle, b, acquire_seed, ablation)
        record = {
            "type": "batch_open",
            "batch_id": f"b{self.pool.round:04d}",
            "round": self.pool.round,
            "indices": list(result.selected),
            "created_at": round(time.time(), 3),
        }
        self.journal.append(record)
        self._apply(record)
        return self.batch

    def submit_label(self, batch_id: str, index: int, class_index: int, annotator: str) -> int:
        with self.lock:
            if self.batch is None or self.batch.batch_id != batch_id:
                raise ServiceError(404, f"no open batch {batch_id!r}")
            if index not in self.batch.indices:
                raise ServiceError(404, f"index {index} is not part of batch {batch_id!r}")
            if not 0 <= class_index < self.dataset.class_count:
                raise ServiceError(422, f"class {class_index} outside [0, {self.dataset.class_count})")
            record = {"type": "label", "batch_id": batch_id, "index": int(index),
                      "class": int(class_index), "annotator": annotator,
                      "submitted_at": round(time.time(), 3)}
            self.journal.append(record)
            self._apply(record)
            return self.seq

    def close_batch(self, batch_id: str) -> dict:
        with self.lock:
            if self.batch is None or self.batch.batch_id != batch_id:
                raise ServiceError(404, f"no open batch {batch_id!r}")
            missing = [i for i in self.batch.indices if i not in self.batch.labels]
            if missing:
                raise ServiceError(412, "batch has unlabeled indices", missing=missing)
            batch_size = len(self.batch.indices)
            record = {"type": "batch_close", "batch_id": batch_id}
            self.journal.append(record)
            self._apply(record)
            return {
                "batch_id": batch_id,
                "round": self.pool.round,
                "labeled": len(self.pool.labeled),
                "unlabeled": len(self.pool.unlabeled),
                "batch_size": batch_size,
                "terminal": self.terminal,
            }

    # -- views -------------------------------------------------------------

    def batch_view(self) -> dict:
        batch = self.get_or_open_batch()
        with self.lock:
            classes = [{"id": c, "name": self.dataset.class_name(c)}
                       for c in range(self.dataset.class_count)]
            items = []
            for i in batch.indices:
                features = np.ascontiguousarray(self.dataset.features[i])
                items.append({
                    "index": int(i),
                    "features_b64": base64.b64encode(features.tobytes()).decode(),
                    "preview": self._preview(i),
                    "labeled": i in batch.labels,
                })
            return {
                "batch_id": batch.batch_id,
                "round": batch.round,
                "created_at": batch.created_at,
                "expires": None,
                "budget": len(batch.indices),
                "progress": batch.completion,
                "classes": classes,
                "items": items,
            }

    def status(self) -> dict:
        with self.lock:
            batch = None
            if self.batch is not None:
                batch = {
                    "batch_id": self.batch.batch_id,
                    "total": len(self.batch.indices),
                    "labeled": len(self.batch.labels),
                    "completion": self.batch.completion,
                }
            return {
                "experiment": self.id,
                "round": self.pool.round,
                "labeled": len(self.pool.labeled),
                "unlabeled": len(self.pool.unlabeled),
                "terminal": self.terminal,
                "batch": batch,
                "last_metrics": self.last_metrics,
            }

    def snapshot_bytes(self) -> bytes:
        """Canonical pool + open-batch state; byte-stable across replays."""
        with self.lock:
            batch = None
            if self.batch is not None:
                batch = {
                    "batch_id": self.batch.batch_id,
                    "round": self.batch.round,
                    "indices": list(self.batch.indices),
                    "labels": {str(k): self.batch.labels[k] for k in sorted(self.batch.labels)},
                    "created_at": self.batch.created_at,
                }
            payload = {"pool": pool_snapshot(self.pool), "batch": batch}
            return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()


_ROUTES = [
    ("GET", re.compile(r"^/v1/experiments/([^/]+)/batch$"), "batch"),
    ("POST", re.compile(r"^/v1/experiments/([^/]+)/batch/close$"), "close"),
    ("GET", re.compile(r"^/v1/experiments/([^/]+)/status$"), "status"),
    ("GET", re.compile(r"^/v1/experiments/([^/]+)/snapshot$"), "snapshot"),
    ("POST", re.compile(r"^/v1/labels$"), "labels"),
]

_MIME = {".html": "text/html", ".js": "text/javascript", ".css": "text/css",
         ".map": "application/json", ".svg": "image/svg+xml", ".ico": "image/x-icon",
         ".png": "image/png"}


def make_handler(runtimes: dict[str, ExperimentRuntime], ui_dir: Path | None):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):  # quiet by default
            pass

        def _send(self, status: int, body: bytes, content_type: str = "application/json"):
            self.send_response(status)
            self.send_header("Content-Type", content_type)
            self.send_header("Content-Length", str(len(body)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            self.wfile.write(body)

        def _send_json(self, status: int, payload: dict):
            self._send(status, json.dumps(payload).encode())

        def do_OPTIONS(self):
            self.send_response(204)
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
            self.send_header("Access-Control-Allow-Headers", "Content-Type")
            self.send_header("Content-Length", "0")
            self.end_headers()

        def _dispatch(self, method: str):
            path = self.path.split("?", 1)[0]
            for verb, pattern, action in _ROUTES:
                match = pattern.match(path)
                if verb == method and match:
                    try:
                        self._handle(action, match)
                    except ServiceError as exc:
                        self._send_json(exc.status, exc.payload)
                    except (ContractViolation, ConfigurationError) as exc:
                        self._send_json(400, {"error": str(exc)})
                    return
            if method == "GET" and ui_dir is not None:
                self._serve_static(path)
                return
            self._send_json(404, {"error": f"no route for {method} {path}"})

        def _serve_static(self, path: str):
            rel = "index.html" if path in ("", "/") else path.lstrip("/")
            target = (ui_dir / rel).resolve()
            if not str(target).startswith(str(ui_dir.resolve())) or not target.is_file():
                self._send_json(404, {"error": f"no route for GET {path}"})
                return
            mime = _MIME.get(target.suffix, "application/octet-stream")
            self._send(200, target.read_bytes(), mime)

        def _runtime(self, experiment_id: str) -> ExperimentRuntime:
            runtime = runtimes.get(experiment_id)
            if runtime is None:
                raise ServiceError(404, f"unknown experiment {experiment_id!r}")
            return runtime

        def _read_body(self) -> dict:
            length = int(self.headers.get("Content-Length") or 0)
            raw = self.rfile.read(length) if length else b"{}"
            try:
                return json.loads(raw.decode())
            except json.JSONDecodeError as exc:
                raise ServiceError(400, f"malformed JSON body: {exc}")

        def _handle(self, action: str, match):
            if action == "batch":
                runtime = self._runtime(match.group(1))
                self._send_json(200, runtime.batch_view())
            elif action == "close":
                runtime = self._runtime(match.group(1))
                body = self._read_body()
                batch_id = body.get("batch_id") or (runtime.batch.batch_id if runtime.batch else "")
                self._send_json(200, runtime.close_batch(batch_id))
            elif action == "status":
                self._send_json(200, self._runtime(match.group(1)).status())
            elif action == "snapshot":
                self._send(200, self._runtime(match.group(1)).snapshot_bytes())
            elif action == "labels":
                body = self._read_body()
                for key in ("batch_id", "index", "class_index"):
                    if key not in body:
                        raise ServiceError(400, f"missing field {key!r}")
                experiment_id = body.get("experiment_id") or next(iter(runtimes))
                runtime = self._runtime(experiment_id)
                seq = runtime.submit_label(body["batch_id"], int(body["index"]),
                                           int(body["class_index"]),
                                           str(body.get("annotator_id", "")))
                self._send_json(200, {"accepted": True, "seq": seq})

        def do_GET(self):
            self._dispatch("GET")

        def do_POST(self):
            self._dispatch("POST")

    return Handler


def serve(config_path, port: int = 8765, data_dir=".", host: str = "127.0.0.1",
          ui_dir=None, ready_file=None) -> None:
    """Run the labeling service until interrupted."""
    raw = json.loads(Path(config_path).read_text())
    experiment_id = raw.pop("experiment_id", "default")
    from .harness import config_from_dict, resolve_dataset

    cfg = config_from_dict(raw)
    dataset = resolve_dataset(cfg)
    runtime = ExperimentRuntime(experiment_id, cfg, dataset, data_dir)
    handler = make_handler({experiment_id: runtime}, Path(ui_dir) if ui_dir else None)
    server = ThreadingHTTPServer((host, port), handler)
    server.daemon_threads = True
    if ready_file:
        Path(ready_file).write_text(json.dumps({"port": server.server_address[1],
                                                "experiment": experiment_id}))
    try:
        server.serve_forever()
    finally:
        server.server_close()
        runtime.journal.close()
