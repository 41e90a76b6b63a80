# data_guard.py - training loss guard
import logging
import math
from typing import List, Optional

logger = logging.getLogger(__name__)


class DivergenceGuard:
    """
    Watches the losses of one training loop.

    A loss that is non-finite, or that grows past `blowup_factor` times the
    first loss seen, marks the run as diverged.
    """

    def __init__(self, name: str, blowup_factor: float = 1e6):
        self.name = name
        self.blowup_factor = blowup_factor
        self.losses: List[float] = []
        self.reason: Optional[str] = None

    def on_loss(self, loss: float) -> bool:
        """Record a loss; returns True while training is still healthy."""
        loss = float(loss)
        self.losses.append(loss)
        if not math.isfinite(loss):
            self.reason = f"non-finite loss {loss} at step {len(self.losses)}"
        elif self.losses[0] > 0 and loss > self.blowup_factor * self.losses[0]:
            self.reason = f"loss blew up to {loss:.4g} (first {self.losses[0]:.4g})"
        if self.reason:
            logger.warning(f"[WARN] {self.name}: {self.reason}")
            return False
        return True

    def is_healthy(self) -> bool:
        return self.reason is None
