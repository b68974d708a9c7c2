"""HTTP review console service.

Serves detection records and heatmaps, accepts confirm/reject decisions,
and propagates confirmations by auto-flagging retrieved similar instances.
Review state is an append-only JSON-lines event log folded over the initial
records; replaying the log reproduces the state exactly, so a restart
changes nothing.
"""

# no `from __future__ import annotations` here: FastAPI must resolve the
# request-body model annotation at runtime
import json
import socket
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Union

from fastapi import FastAPI, HTTPException, Query, Request
from fastapi.responses import FileResponse, HTMLResponse, JSONResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from rfcam.detector import STATUSES, DetectionRecord, read_records
from rfcam.retrieval import similar_instances
from rfcam.tensor_store import TensorBundle, load_bundle

EVENT_LOG_NAME = "review_events.jsonl"
DECISIONS = ("confirm", "reject")
REVIEWABLE = ("pending", "auto_flagged")


@dataclass(frozen=True)
class ReviewEvent:
    timestamp: str  # UTC ISO-8601
    instance_id: str
    action: str  # confirm | reject | auto_flag
    actor: str
    note: Optional[str] = None
    feature: Optional[int] = None
    source: Optional[str] = None  # confirming instance, for auto_flag events

    def to_json_dict(self) -> dict:
        return {
            "timestamp": self.timestamp,
            "instance_id": self.instance_id,
            "action": self.action,
            "actor": self.actor,
            "note": self.note,
            "feature": self.feature,
            "source": self.source,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "ReviewEvent":
        return cls(
            timestamp=doc["timestamp"],
            instance_id=doc["instance_id"],
            action=doc["action"],
            actor=doc.get("actor", ""),
            note=doc.get("note"),
            feature=doc.get("feature"),
            source=doc.get("source"),
        )


class ReviewStore:
    """Record statuses as a fold of the event log; writes serialized by a lock."""

    def __init__(self, records: list[DetectionRecord], log_path: Path):
        self._lock = threading.Lock()
        self._log_path = log_path
        self._records = {r.instance_id: r for r in records}
        self._log_handle = None
        # snapshot = (statuses, groups); replaced wholesale after each write
        # so readers never observe a half-applied confirm + auto-flag batch
        statuses = {r.instance_id: r.status for r in records}
        groups: dict[str, list[str]] = {}
        if log_path.exists():
            for line in log_path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    self._fold(ReviewEvent.from_json_dict(json.loads(line)), statuses, groups)
        self._snapshot: tuple[dict[str, str], dict[str, list[str]]] = (statuses, groups)

    @property
    def records(self) -> dict[str, DetectionRecord]:
        return self._records

    @property
    def statuses(self) -> dict[str, str]:
        return self._snapshot[0]

    @property
    def groups(self) -> dict[str, list[str]]:
        return self._snapshot[1]

    def status_of(self, instance_id: str) -> str:
        return self._snapshot[0][instance_id]

    def _fold(self, event: ReviewEvent, statuses: dict, groups: dict) -> None:
        if event.instance_id not in statuses:
            return
        if event.action in DECISIONS:
            statuses[event.instance_id] = "confirmed" if event.action == "confirm" else "rejected"
        elif event.action == "auto_flag" and statuses[event.instance_id] == "pending":
            statuses[event.instance_id] = "auto_flagged"
            if event.source:
                groups.setdefault(event.source, []).append(event.instance_id)

    def _append(self, event: ReviewEvent, statuses: dict, groups: dict) -> None:
        if self._log_handle is None:
            self._log_handle = open(self._log_path, "a", encoding="utf-8")
        self._log_handle.write(json.dumps(event.to_json_dict()) + "\n")
        self._log_handle.flush()
        self._fold(event, statuses, groups)

    def close(self) -> None:
        if self._log_handle is not None:
            self._log_handle.close()
            self._log_handle = None

    def review(
        self,
        instance_id: str,
        decision: str,
        actor: str,
        note: Optional[str],
        bundle: TensorBundle,
        auto_flag_top_n: int,
    ) -> tuple[DetectionRecord, list[str]]:
        """Apply a decision; confirming also auto-flags similar pending instances."""
        with self._lock:
            record = self._records.get(instance_id)
            if record is None:
                raise HTTPException(status_code=404, detail=f"unknown instance {instance_id!r}")
            statuses, groups = self._snapshot
            if statuses[instance_id] not in REVIEWABLE:
                raise HTTPException(
                    status_code=409,
                    detail=f"instance {instance_id!r} already {statuses[instance_id]}",
                )
            new_statuses = dict(statuses)
            new_groups = {k: list(v) for k, v in groups.items()}
            now = datetime.now(timezone.utc).isoformat()
            self._append(ReviewEvent(
                timestamp=now, instance_id=instance_id, action=decision,
                actor=actor, note=note, feature=record.top_feature,
            ), new_statuses, new_groups)
            flagged_ids: list[str] = []
            if decision == "confirm":
                result = similar_instances(
                    bundle,
                    record.predicted_class,
                    record.top_feature,
                    instance_id,
                    auto_flag_top_n,
                    candidate_ids=self._records.keys(),
                )
                for hit_id, _ in result.ranked:
                    if new_statuses.get(hit_id) == "pending":
                        self._append(ReviewEvent(
                            timestamp=now, instance_id=hit_id, action="auto_flag",
                            actor=actor, feature=record.top_feature, source=instance_id,
                        ), new_statuses, new_groups)
                        flagged_ids.append(hit_id)
            self._snapshot = (new_statuses, new_groups)
            return record, flagged_ids


class ReviewBody(BaseModel):
    decision: str
    note: Optional[str] = None
    actor: str = "reviewer"


PLACEHOLDER_PAGE = """<!doctype html>
<html><head><title>rfcam review console</title></head>
<body style="font-family: sans-serif; margin: 3em;">
<h1>rfcam review service</h1>
<p>The service is running. The browser console is not built or was not passed
via <code>--ui</code>; the JSON API is available under <code>/api/</code>.</p>
</body></html>"""


def create_app(
    records_dir: Union[str, Path],
    bundle_dir: Union[str, Path],
    ui_dir: Optional[Union[str, Path]] = None,
    auto_flag_top_n: int = 10,
) -> FastAPI:
    records_dir = Path(records_dir)
    records_path = records_dir / "records.jsonl"
    if not records_path.exists():
        raise FileNotFoundError(f"records not found: {records_path}")
    bundle = load_bundle(bundle_dir)
    store = ReviewStore(read_records(records_path), records_dir / EVENT_LOG_NAME)

    report_path = records_dir / "report.json"
    detection_config = {}
    if report_path.exists():
        detection_config = json.loads(report_path.read_text(encoding="utf-8")).get(
            "config", {}
        ).get("detection", {})

    app = FastAPI(title="rfcam review service")
    app.state.store = store

    def summarize(record: DetectionRecord, statuses: Optional[dict] = None) -> dict:
        status = (statuses or store.statuses)[record.instance_id]
        media = {}
        if "rf_cam" in record.map_paths:
            media["rf_cam_url"] = f"/media/{record.instance_id}/rf.png"
        if "grad_cam" in record.map_paths:
            media["grad_cam_url"] = f"/media/{record.instance_id}/gc.png"
        return {
            "instance_id": record.instance_id,
            "predicted_class": record.predicted_class,
            "class_name": bundle.manifest.class_names[record.predicted_class],
            "true_class": record.true_class,
            "dissimilarity": record.dissimilarity,
            "flagged": record.flagged,
            "status": status,
            "top_feature": record.top_feature,
            "warning": record.warning,
            **media,
        }

    @app.get("/api/health")
    def health() -> dict:
        return {"status": "ok"}

    @app.get("/api/config")
    def config() -> dict:
        return {
            "theta": detection_config.get("mse_threshold", 15.0),
            "mask_threshold": detection_config.get("mask_threshold", 0.78),
            "auto_flag_top_n": auto_flag_top_n,
            "class_names": list(bundle.manifest.class_names),
            "statuses": list(STATUSES),
        }

    @app.get("/api/summary")
    def summary() -> dict:
        statuses, groups = store.statuses, store.groups
        records = store.records.values()
        by_status = {status: 0 for status in STATUSES}
        for status in statuses.values():
            by_status[status] += 1
        per_class = []
        for c, name in enumerate(bundle.manifest.class_names):
            rows = [r for r in records if r.predicted_class == c]
            per_class.append({
                "class_index": c,
                "class_name": name,
                "total": len(rows),
                "flagged": sum(1 for r in rows if r.flagged),
                "confirmed": sum(1 for r in rows if statuses[r.instance_id] == "confirmed"),
            })
        return {
            "total": len(records),
            "flagged": sum(1 for r in records if r.flagged),
            "by_status": by_status,
            "per_class": per_class,
            "groups": {k: sorted(v) for k, v in sorted(groups.items())},
        }

    @app.get("/api/instances")
    def list_instances(
        status: Optional[str] = None,
        class_index: Optional[str] = Query(default=None, alias="class"),
        page: int = 1,
        page_size: int = 20,
    ) -> dict:
        if status is not None and status != "flagged" and status not in STATUSES:
            raise HTTPException(status_code=400, detail=f"bad value for filter 'status': {status!r}")
        cls = None
        if class_index is not None:
            try:
                cls = int(class_index)
            except ValueError:
                raise HTTPException(
                    status_code=400, detail=f"bad value for filter 'class': {class_index!r}"
                ) from None
            if not 0 <= cls < bundle.manifest.num_classes:
                raise HTTPException(status_code=400, detail=f"bad value for filter 'class': {cls}")
        if page < 1 or page_size < 1 or page_size > 500:
            raise HTTPException(status_code=400, detail="bad value for 'page' or 'page_size'")

        statuses = store.statuses
        rows = list(store.records.values())
        if status == "flagged":
            rows = [r for r in rows if r.flagged]
        elif status is not None:
            rows = [r for r in rows if statuses[r.instance_id] == status]
        if cls is not None:
            rows = [r for r in rows if r.predicted_class == cls]
        rows.sort(key=lambda r: (-r.dissimilarity, r.instance_id))
        start = (page - 1) * page_size
        return {
            "items": [summarize(r, statuses) for r in rows[start:start + page_size]],
            "total": len(rows),
            "page": page,
            "page_size": page_size,
        }

    @app.get("/api/instances/{instance_id}")
    def get_instance(instance_id: str) -> dict:
        record = store.records.get(instance_id)
        if record is None:
            raise HTTPException(status_code=404, detail=f"unknown instance {instance_id!r}")
        return summarize(record)

    @app.post("/api/instances/{instance_id}/review")
    def review(instance_id: str, body: ReviewBody) -> dict:
        if body.decision not in DECISIONS:
            raise HTTPException(status_code=400, detail=f"decision must be one of {DECISIONS}")
        record, flagged_ids = store.review(
            instance_id, body.decision, body.actor, body.note, bundle, auto_flag_top_n,
        )
        return {"record": summarize(record), "auto_flagged": flagged_ids}

    @app.get("/api/instances/{instance_id}/similar")
    def similar(instance_id: str, n: int = 4) -> dict:
        record = store.records.get(instance_id)
        if record is None:
            raise HTTPException(status_code=404, detail=f"unknown instance {instance_id!r}")
        if n < 1:
            raise HTTPException(status_code=400, detail="n must be >= 1")
        result = similar_instances(
            bundle, record.predicted_class, record.top_feature, instance_id, n,
            candidate_ids=store.records.keys(),
        )
        statuses = store.statuses
        items = []
        for hit_id, score in result.ranked:
            hit = store.records[hit_id]
            items.append({**summarize(hit, statuses), "activation": score})
        return {
            "query_instance": instance_id,
            "feature": result.feature,
            "class_index": result.class_index,
            "items": items,
        }

    @app.get("/media/{instance_id}/{kind}.png")
    def media(instance_id: str, kind: str):
        record = store.records.get(instance_id)
        key = {"rf": "rf_cam", "gc": "grad_cam"}.get(kind)
        if record is None or key is None or key not in record.map_paths:
            raise HTTPException(status_code=404, detail="no such heatmap")
        path = records_dir / record.map_paths[key]
        if not path.exists():
            raise HTTPException(status_code=404, detail="heatmap file missing")
        return FileResponse(path, media_type="image/png")

    @app.exception_handler(Exception)
    async def unhandled(request: Request, exc: Exception):
        return JSONResponse(status_code=500, content={"detail": str(exc)})

    if ui_dir is not None and Path(ui_dir).is_dir():
        app.mount("/", StaticFiles(directory=ui_dir, html=True), name="ui")
    else:
        @app.get("/", response_class=HTMLResponse)
        def index() -> str:
            return PLACEHOLDER_PAGE

    return app


def serve(
    records_dir: Path,
    bundle_dir: Path,
    host: str = "127.0.0.1",
    port: int = 8787,
    ui_dir: Optional[Path] = None,
    auto_flag_top_n: int = 10,
) -> None:
    """Run the service until interrupted; a busy port raises OSError."""
    import uvicorn

    app = create_app(records_dir, bundle_dir, ui_dir=ui_dir, auto_flag_top_n=auto_flag_top_n)
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    sock.bind((host, port))  # OSError here means the port is in use
    config = uvicorn.Config(app, log_level="warning")
    server = uvicorn.Server(config)
    try:
        server.run(sockets=[sock])
    finally:
        app.state.store.close()
        sock.close()
