"""Wire-format layer shared by the headless service and the operator console:
telemetry frames out, validated command messages in.  One JSON object per
line; the schema is documented in data/protocol_schema.json."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

MAX_FRAME_BYTES = 8192
MAX_LISTED_TASKS = 40

COMMAND_KINDS = ("set_mode", "jog_platform", "jog_arm", "load_mission",
                 "coordinate_drive", "start", "pause", "estop", "reset")


class CommandError(ValueError):
    """Rejected command message."""


@dataclass(frozen=True)
class CommandMessage:
    kind: str
    payload: dict
    id: int | None = None


def build_frame(rt) -> dict:
    """Snapshot the runtime into one telemetry frame (bounded size)."""
    w = rt.world
    m = rt.est.mean
    wrench = rt.rig.last_wrench
    frame = {
        "type": "telemetry",
        "time": round(w.time, 4),
        "mode": rt.mode,
        "est": {"x": float(m[0]), "y": float(m[1]), "yaw": float(m[2]),
                "v": float(m[3])},
        "true": {"x": w.platform_pose.x, "y": w.platform_pose.y,
                 "yaw": w.platform_pose.yaw},
        "wheels": [w.wheel_speeds[0], w.wheel_speeds[1]],
        "joints": [float(q) for q in w.arm_joints],
        "wrench": {"fx": wrench.fx, "fy": wrench.fy, "fz": wrench.fz,
                   "tx": wrench.tx, "ty": wrench.ty, "tz": wrench.tz,
                   "valid": wrench.valid},
        "filtered_fz": rt.rig.filtered_fz,
        "last_detection": rt.last_detection,
        "mission": None,
    }
    if rt.mission is not None:
        active = rt.mission.running_index
        tasks = rt.mission.tasks
        window = tasks[:MAX_LISTED_TASKS]
        frame["mission"] = {
            "started": rt.mission_started,
            "counts": rt.mission.counts(),
            "total": len(tasks),
            "active": None if active is None else {
                "index": active, "kind": tasks[active].kind,
                "weed_id": tasks[active].weed_id},
            "tasks": [{"kind": t.kind, "weed_id": t.weed_id,
                       "status": t.status} for t in window],
        }
        weeds = {}
        for t in tasks:
            if t.kind == "transfer_platform":
                weeds[t.weed_id] = {"id": t.weed_id, "x": t.params["x"],
                                    "y": t.params["y"], "status": "pending"}
        for weed in w.weeds:
            if weed.id in weeds:
                weeds[weed.id]["status"] = ("removed" if weed.removed
                                            else weeds[weed.id]["status"])
        for t in tasks:
            if t.weed_id in weeds and t.status in ("failed", "skipped") \
                    and weeds[t.weed_id]["status"] == "pending":
                weeds[t.weed_id]["status"] = t.status
        frame["weeds"] = list(weeds.values())[:MAX_LISTED_TASKS]
    return frame


def serialize_frame(frame: dict) -> str:
    text = json.dumps(frame, separators=(",", ":"), allow_nan=False)
    if len(text.encode()) > MAX_FRAME_BYTES:
        raise ValueError(f"telemetry frame exceeds {MAX_FRAME_BYTES} bytes")
    return text


def parse_frame(text: str) -> dict:
    return json.loads(text)


def _require_number(payload: dict, key: str) -> float:
    value = payload.get(key)
    if not isinstance(value, (int, float)) or isinstance(value, bool) \
            or not math.isfinite(value):
        raise CommandError(f"field '{key}' must be a finite number")
    return float(value)


def parse_command(data, limits) -> CommandMessage:
    """Validate a raw command object.  `limits` carries (v_max, omega_max,
    joint_rate_max) used to reject over-limit jogs before they reach the
    control loop."""
    if isinstance(data, str):
        try:
            data = json.loads(data)
        except json.JSONDecodeError as exc:
            raise CommandError(f"invalid JSON: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise CommandError("command must be a JSON object")
    kind = data.get("kind")
    if kind not in COMMAND_KINDS:
        raise CommandError(f"unknown command kind {kind!r}")
    payload = data.get("payload", {})
    if not isinstance(payload, dict):
        raise CommandError("payload must be an object")
    v_max, omega_max, joint_rate_max = limits
    if kind == "set_mode":
        if payload.get("mode") not in ("mission", "joystick",
                                       "coordinate_drive", "idle", "estop"):
            raise CommandError("set_mode needs a valid 'mode'")
    elif kind == "jog_platform":
        v = _require_number(payload, "v")
        omega = _require_number(payload, "omega")
        if abs(v) > v_max or abs(omega) > omega_max:
            raise CommandError("jog outside platform limits")
    elif kind == "jog_arm":
        rates = payload.get("rates")
        if not isinstance(rates, list) or len(rates) != 6:
            raise CommandError("jog_arm needs 6 joint rates")
        for r in rates:
            if not isinstance(r, (int, float)) or isinstance(r, bool) \
                    or not math.isfinite(r) or abs(r) > joint_rate_max:
                raise CommandError("joint rate outside limits")
    elif kind == "coordinate_drive":
        _require_number(payload, "x")
        _require_number(payload, "y")
    elif kind == "load_mission":
        if not isinstance(payload.get("weeds"), list):
            raise CommandError("load_mission needs a 'weeds' array")
        for i, weed in enumerate(payload["weeds"]):
            if not isinstance(weed, dict) or "id" not in weed:
                raise CommandError(f"weed #{i} must be an object with an id")
            _require_number(weed, "x")
            _require_number(weed, "y")
    msg_id = data.get("id")
    if msg_id is not None and not isinstance(msg_id, int):
        raise CommandError("id must be an integer")
    return CommandMessage(kind=kind, payload=payload, id=msg_id)
