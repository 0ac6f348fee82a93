"""File-exchange detector service.

Watches one exchange directory for ``<id>.req.json`` records, runs the
configured model on the referenced PNG, and writes ``<id>.resp.json``. All
responses are moved into place atomically (write-then-rename) so the client
never observes a partial record, and a response is only produced after its
request has been fully read. One request is handled at a time.

Wire schemas (shared with the pipeline side by convention):

    request  = {"image": <png filename>, "width": int, "height": int}
    response = {"boxes": [{"x_min", "y_min", "x_max", "y_max", "score"}...]}
               plus an optional "error" string when inference failed.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np
from PIL import Image

from .models import Model, load_model

logger = logging.getLogger(__name__)

REQUEST_SCHEMA = {
    "type": "object",
    "properties": {
        "image": {"type": "string"},
        "width": {"type": "integer", "minimum": 1},
        "height": {"type": "integer", "minimum": 1},
    },
    "required": ["image", "width", "height"],
    "additionalProperties": False,
}

RESPONSE_SCHEMA = {
    "type": "object",
    "properties": {
        "boxes": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "x_min": {"type": "number"},
                    "y_min": {"type": "number"},
                    "x_max": {"type": "number"},
                    "y_max": {"type": "number"},
                    "score": {"type": "number", "minimum": 0, "maximum": 1},
                },
                "required": ["x_min", "y_min", "x_max", "y_max", "score"],
                "additionalProperties": False,
            },
        },
        "error": {"type": "string"},
    },
    "required": ["boxes"],
    "additionalProperties": False,
}


@dataclass(frozen=True)
class AdapterConfig:
    exchange_dir: str
    model: str = "hsv"
    score_threshold: float = 0.0  # raw scores pass through by default
    poll_interval_ms: float = 20.0
    stub_boxes: tuple = ()

    def __post_init__(self) -> None:
        if not (0.0 <= self.score_threshold <= 1.0):
            raise ValueError(f"score_threshold {self.score_threshold} outside [0, 1]")
        if self.poll_interval_ms <= 0:
            raise ValueError("poll_interval_ms must be positive")


def load_adapter_config(path: str | Path) -> AdapterConfig:
    data = json.loads(Path(path).read_text())
    boxes = tuple(data.pop("stub_boxes", ()))
    return AdapterConfig(stub_boxes=boxes, **data)


def _answer(exchange_dir: Path, request_path: Path, model: Model,
            config: AdapterConfig) -> None:
    request_id = request_path.name[: -len(".req.json")]
    try:
        request = json.loads(request_path.read_text())
        jsonschema.validate(request, REQUEST_SCHEMA)
    except (json.JSONDecodeError, jsonschema.ValidationError) as exc:
        response = {"boxes": [], "error": f"malformed request: {exc}"}
        _write_response(exchange_dir, request_id, response)
        return

    try:
        image_path = exchange_dir / request["image"]
        with Image.open(image_path) as img:
            image = np.asarray(img.convert("RGB"))
        raw = model(image)
        boxes = [b for b in raw if b["score"] >= config.score_threshold]
        response = {"boxes": boxes}
    except Exception as exc:
        logger.warning("request %s failed: %s", request_id, exc)
        response = {"boxes": [], "error": str(exc)}

    jsonschema.validate(response, RESPONSE_SCHEMA)
    _write_response(exchange_dir, request_id, response)


def _write_response(exchange_dir: Path, request_id: str, response: dict) -> None:
    tmp = exchange_dir / f"{request_id}.resp.json.tmp"
    tmp.write_text(json.dumps(response, sort_keys=True))
    tmp.replace(exchange_dir / f"{request_id}.resp.json")


def serve(exchange_dir: str | Path, config: AdapterConfig,
          stop_event: Optional[threading.Event] = None,
          max_requests: Optional[int] = None) -> int:
    """Serves detection requests until interrupted.

    Args:
        exchange_dir: Directory shared with the pipeline client.
        config: Adapter settings (model, threshold, poll interval).
        stop_event: Optional cooperative shutdown signal.
        max_requests: Stop after this many answered requests (testing).

    Returns:
        The number of requests answered.

    Raises:
        ModelLoadError: the configured model cannot be loaded at startup.
    """
    exchange_dir = Path(exchange_dir)
    exchange_dir.mkdir(parents=True, exist_ok=True)
    model = load_model(config.model, stub_boxes=list(config.stub_boxes))
    logger.info("serving %s with model %r", exchange_dir, config.model)

    answered = 0
    seen: set[str] = set()
    interval = config.poll_interval_ms / 1000.0
    try:
        while stop_event is None or not stop_event.is_set():
            pending = [p for p in sorted(exchange_dir.glob("*.req.json"))
                       if p.name not in seen
                       and not (exchange_dir / p.name.replace(".req.json",
                                                              ".resp.json")).exists()]
            for request_path in pending:
                seen.add(request_path.name)
                _answer(exchange_dir, request_path, model, config)
                answered += 1
                if max_requests is not None and answered >= max_requests:
                    return answered
            if len(seen) > 10_000:  # the client deletes consumed triplets
                seen = {name for name in seen
                        if (exchange_dir / name).exists()}
            time.sleep(interval)
    except KeyboardInterrupt:
        logger.info("interrupted after %d requests", answered)
    return answered
