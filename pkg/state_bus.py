# state_bus.py - per-campaign status bus (heartbeat + alerts)
from dataclasses import asdict, dataclass
from threading import RLock
from time import time
from typing import Any, Dict, List, Optional


@dataclass
class Heartbeat:
    seq: int = 0
    round: int = 0
    outcome: str = ""
    decision: str = ""
    source: str = ""
    harvested: int = 0
    exemplars: int = 0
    val_acc: Optional[float] = None
    traces: int = 0
    loop_lag_ms: Optional[int] = None


class StatusBus:
    """
    Thread-safe status shared between a campaign loop and whoever reports on it.
    One bus per campaign; parallel campaigns never share one.
    """

    def __init__(self, name: str = "campaign"):
        self._lock = RLock()
        self.name = name
        self.started_at: float = time()
        self.toggles: str = ""
        self.rounds_done: int = 0
        self.stopped: bool = False
        self.alerts: List[Dict[str, Any]] = []
        self.heartbeat: Heartbeat = Heartbeat()

    def update(self, **kwargs: Any) -> None:
        """Shallow update of known fields."""
        with self._lock:
            for k, v in kwargs.items():
                if hasattr(self, k) and not k.startswith("_"):
                    setattr(self, k, v)

    def update_heartbeat(self, **kwargs: Any) -> Heartbeat:
        """Replace the heartbeat, bumping seq; missing fields keep their last value."""
        with self._lock:
            fields = asdict(self.heartbeat)
            fields.update({k: v for k, v in kwargs.items() if k in fields})
            fields["seq"] = self.heartbeat.seq + 1
            self.heartbeat = Heartbeat(**fields)
            return self.heartbeat

    def add_alert(self, text: str, kind: str = "info", round_index: Optional[int] = None) -> None:
        with self._lock:
            self.alerts.append({
                "id": len(self.alerts) + 1,
                "text": text,
                "kind": kind,
                "round": round_index,
            })

    def uptime_seconds(self) -> int:
        with self._lock:
            return int(time() - self.started_at)

    def snapshot(self) -> Dict[str, Any]:
        with self._lock:
            return {
                "name": self.name,
                "toggles": self.toggles,
                "rounds_done": self.rounds_done,
                "stopped": self.stopped,
                "uptime_s": self.uptime_seconds(),
                "alerts": list(self.alerts),
                "heartbeat": asdict(self.heartbeat),
            }

    def heartbeat_line(self) -> str:
        """One-line summary in the `HB #n | ...` format."""
        with self._lock:
            hb = self.heartbeat
            acc = f"{hb.val_acc:.3f}" if hb.val_acc is not None else "n/a"
            lag = f"{hb.loop_lag_ms}ms" if hb.loop_lag_ms is not None else "n/a"
            return (f"HB #{hb.seq} | {self.name} | round={hb.round} | src={hb.source} | "
                    f"outcome={hb.outcome} | decision={hb.decision} | harvested={hb.harvested} | "
                    f"exemplars={hb.exemplars} | val_acc={acc} | traces={hb.traces} | lag={lag}")
