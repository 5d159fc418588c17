"""Session configuration and per-session communication accounting."""

from dataclasses import asdict, dataclass
from enum import Enum
from typing import Any

from cipherdenoise.encoding import DEFAULT_FRAC_BITS
from cipherdenoise.errors import CipherDenoiseError
from cipherdenoise.protocol.activation import DEFAULT_PERTURBANCE_BOUND
from cipherdenoise.protocol.wire import DOWNLOAD_TAGS, UPLOAD_TAGS, Frame, Framework, MessageTag

DEFAULT_MIN_KEY_BITS = 512
DEFAULT_MAX_SESSIONS = 8


class PerturbanceMode(str, Enum):
    """How the server draws M for each activation.

    ``identity`` exposes clean features to the client and exists for the
    attack experiment's counterfactual; ``fixed`` reuses one M per layer
    across sessions.
    """

    RANDOM = "random"
    FIXED = "fixed"
    IDENTITY = "identity"


@dataclass(frozen=True)
class ServerConfig:
    perturbance_bound: int = DEFAULT_PERTURBANCE_BOUND
    perturbance: PerturbanceMode = PerturbanceMode.RANDOM
    seed: int | None = None
    fixed_seed: int = 0
    max_sessions: int = DEFAULT_MAX_SESSIONS
    min_key_bits: int = DEFAULT_MIN_KEY_BITS
    name: str = "cipherdenoise"

    def __post_init__(self) -> None:
        object.__setattr__(self, "perturbance", PerturbanceMode(self.perturbance))
        if self.perturbance_bound < 1:
            raise CipherDenoiseError("perturbance bound must be at least 1")
        if self.max_sessions < 1:
            raise CipherDenoiseError("max sessions must be at least 1")


@dataclass(frozen=True)
class ClientConfig:
    framework: Framework = Framework.AUTO
    seed: int | None = None
    frac_bits: int = DEFAULT_FRAC_BITS
    retain_features: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "framework", Framework(self.framework))


@dataclass
class SessionMetrics:
    """Payload bytes of data frames in each direction, plus handshake bytes.

    ``up`` is client to server. Counters only grow.
    """

    session_id: str = ""
    framework: str = ""
    up_bytes: int = 0
    down_bytes: int = 0
    handshake_up: int = 0
    handshake_down: int = 0
    act_round_trips: int = 0
    outcome: str = "open"

    def count(self, frame: Frame, upload: bool) -> None:
        size = len(frame.payload)
        if frame.tag in UPLOAD_TAGS or frame.tag in DOWNLOAD_TAGS:
            if upload:
                self.up_bytes += size
            else:
                self.down_bytes += size
        elif upload:
            self.handshake_up += frame.wire_size
        else:
            self.handshake_down += frame.wire_size
        if frame.tag is MessageTag.ACT_REQUEST:
            self.act_round_trips += 1

    def log_line(self) -> str:
        return (
            f"session={self.session_id} framework={self.framework} "
            f"up={self.up_bytes} down={self.down_bytes} act_round_trips={self.act_round_trips}"
        )

    def table(self) -> str:
        rows = [
            ("framework", self.framework),
            ("upload (bytes)", str(self.up_bytes)),
            ("download (bytes)", str(self.down_bytes)),
            ("activation round trips", str(self.act_round_trips)),
            ("handshake up/down (bytes)", f"{self.handshake_up}/{self.handshake_down}"),
        ]
        width = max(len(label) for label, _ in rows)
        return "\n".join(f"{label:<{width}}  {value}" for label, value in rows)

    def as_dict(self) -> dict[str, Any]:
        return asdict(self)
