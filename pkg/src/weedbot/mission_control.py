"""Mission executive: expand a weed map into per-weed task triples, dispatch
them in order with a skip-on-failure policy, and police control-mode
transitions (mission / joystick / coordinate drive / idle / estop)."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

EARTH_RADIUS = 6371000.0

TRANSFER = "transfer_platform"
ACQUIRE = "acquire_image"
WEEDING = "weeding_action"
TASK_KINDS = (TRANSFER, ACQUIRE, WEEDING)

PENDING, RUNNING, DONE, FAILED, SKIPPED = (
    "pending", "running", "done", "failed", "skipped")

MODE_MISSION = "mission"
MODE_JOYSTICK = "joystick"
MODE_COORDINATE = "coordinate_drive"
MODE_IDLE = "idle"
MODE_ESTOP = "estop"
MODES = (MODE_MISSION, MODE_JOYSTICK, MODE_COORDINATE, MODE_IDLE, MODE_ESTOP)


class WeedMapError(ValueError):
    """Malformed weed map file."""


class ProtocolError(RuntimeError):
    """Task event that does not match the executive's state."""


@dataclass
class Task:
    kind: str
    weed_id: int
    params: dict = field(default_factory=dict)
    status: str = PENDING
    attempts: int = 0
    detail: str = ""


@dataclass
class Mission:
    tasks: list
    source: str = ""

    @property
    def running_index(self):
        for i, t in enumerate(self.tasks):
            if t.status == RUNNING:
                return i
        return None

    def next_pending(self):
        for i, t in enumerate(self.tasks):
            if t.status == PENDING:
                return i
        return None

    @property
    def complete(self) -> bool:
        return all(t.status in (DONE, FAILED, SKIPPED) for t in self.tasks)

    def counts(self) -> dict:
        out = {s: 0 for s in (PENDING, RUNNING, DONE, FAILED, SKIPPED)}
        for t in self.tasks:
            out[t.status] += 1
        return out


# -- commands emitted toward the executing modules ---------------------------

@dataclass(frozen=True)
class NavigateTo:
    weed_id: int
    x: float
    y: float


@dataclass(frozen=True)
class CaptureImage:
    weed_id: int


@dataclass(frozen=True)
class WeedAt:
    weed_id: int
    root: tuple            # (x, y, z) platform frame


@dataclass(frozen=True)
class StopPlatform:
    reason: str = "mission complete"


@dataclass(frozen=True)
class TaskEvent:
    kind: str              # "start" | "task_done" | "task_failed"
    task_index: int = -1
    payload: dict = field(default_factory=dict)


def _weed_entries(data) -> list:
    if isinstance(data, dict):
        origin = data.get("origin")
        weeds = data.get("weeds")
        if weeds is None:
            raise WeedMapError("weed map object needs a 'weeds' array")
        if origin is not None:
            lat0, lon0 = math.radians(origin["lat"]), math.radians(origin["lon"])
            out = []
            for w in weeds:
                lat, lon = math.radians(w["lat"]), math.radians(w["lon"])
                out.append({**w,
                            "x": (lon - lon0) * math.cos(lat0) * EARTH_RADIUS,
                            "y": (lat - lat0) * EARTH_RADIUS})
            return out
        return list(weeds)
    if isinstance(data, list):
        return data
    raise WeedMapError("weed map must be a JSON array or object")


def load_weed_map(source) -> Mission:
    """Parse a weed map (JSON array of {id, x, y} in local ENU metres, or
    {origin:{lat,lon}, weeds:[{id,lat,lon}]}) into a mission of three tasks
    per weed, in map order."""
    if isinstance(source, (str, Path)):
        path = Path(source)
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError:
            raise WeedMapError(f"weed map not found: {source}") from None
        except json.JSONDecodeError as exc:
            raise WeedMapError(f"{source}: invalid JSON at line {exc.lineno}: "
                               f"{exc.msg}") from exc
        name = str(source)
    else:
        data = source
        name = "<inline>"
    tasks = []
    seen = set()
    for i, entry in enumerate(_weed_entries(data)):
        if not isinstance(entry, dict) or "id" not in entry:
            raise WeedMapError(f"weed #{i}: entry must be an object with an id")
        wid = entry["id"]
        if wid in seen:
            raise WeedMapError(f"weed id {wid} appears twice")
        seen.add(wid)
        try:
            x, y = float(entry["x"]), float(entry["y"])
        except (KeyError, TypeError, ValueError):
            raise WeedMapError(f"weed {wid}: missing or non-numeric x/y") from None
        if not (math.isfinite(x) and math.isfinite(y)):
            raise WeedMapError(f"weed {wid}: non-finite coordinate")
        tasks.append(Task(kind=TRANSFER, weed_id=wid, params={"x": x, "y": y}))
        tasks.append(Task(kind=ACQUIRE, weed_id=wid))
        tasks.append(Task(kind=WEEDING, weed_id=wid))
    return Mission(tasks=tasks, source=name)


def _command_for(task: Task):
    if task.kind == TRANSFER:
        return NavigateTo(task.weed_id, task.params["x"], task.params["y"])
    if task.kind == ACQUIRE:
        return CaptureImage(task.weed_id)
    return WeedAt(task.weed_id, tuple(task.params["root"]))


def _skip_rest_of_weed(mission: Mission, weed_id: int, reason: str) -> None:
    for t in mission.tasks:
        if t.weed_id == weed_id and t.status == PENDING:
            t.status = SKIPPED
            t.detail = reason


def _start_next(mission: Mission):
    idx = mission.next_pending()
    if idx is None:
        return StopPlatform()
    task = mission.tasks[idx]
    if task.kind == WEEDING and "root" not in task.params:
        task.status = SKIPPED
        task.detail = "no root position from image acquisition"
        return _start_next(mission)
    task.status = RUNNING
    task.attempts += 1
    return _command_for(task)


def dispatch(mission: Mission, event: TaskEvent, image_retries: int = 1):
    """Advance the executive by one task event.  Returns (mission, command);
    the command is what the next executing module should do, StopPlatform when
    the mission is complete, or None when nothing new starts."""
    if event.kind == "start":
        if mission.running_index is not None:
            raise ProtocolError("mission already has a running task")
        return mission, _start_next(mission)

    idx = mission.running_index
    if idx is None or idx != event.task_index:
        raise ProtocolError(
            f"event {event.kind} for task {event.task_index}, "
            f"running task is {idx}")
    task = mission.tasks[idx]

    if event.kind == "task_done":
        task.status = DONE
        task.detail = event.payload.get("detail", "")
        if task.kind == ACQUIRE and "root" in event.payload:
            for t in mission.tasks:
                if t.weed_id == task.weed_id and t.kind == WEEDING:
                    t.params["root"] = tuple(event.payload["root"])
        return mission, _start_next(mission)

    if event.kind == "task_failed":
        reason = event.payload.get("reason", "failed")
        if task.kind == ACQUIRE and task.attempts <= image_retries:
            task.status = RUNNING
            task.attempts += 1
            task.detail = f"retry after: {reason}"
            return mission, _command_for(task)
        task.status = FAILED
        task.detail = reason
        if task.kind in (TRANSFER, ACQUIRE):
            _skip_rest_of_weed(mission, task.weed_id, f"{task.kind} failed")
        return mission, _start_next(mission)

    raise ProtocolError(f"unknown event kind {event.kind!r}")


def set_mode(current: str, requested: str, arm_moving: bool,
             platform_moving: bool) -> str:
    """Mode transition table: estop wins from anywhere and only resets through
    idle; every other change must pass through idle, and the robot must be
    stationary to leave idle."""
    if requested not in MODES:
        return current
    if requested == MODE_ESTOP:
        return MODE_ESTOP
    if current == MODE_ESTOP:
        return MODE_IDLE if requested == MODE_IDLE else current
    if requested == current:
        return current
    if requested == MODE_IDLE:
        return MODE_IDLE
    if current != MODE_IDLE:
        return current                      # must pass through idle
    if arm_moving or platform_moving:
        return current
    return requested
