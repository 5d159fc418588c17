from cipherdenoise.protocol.activation import (
    PerturbanceMatrix,
    SignMatrix,
    sample_perturbance,
    server_activate_leaky,
    server_combine_and_activate,
    server_perturb,
    server_threshold_shift,
)
from cipherdenoise.protocol.client import ClientSession, InferenceClient, client_act, decrypt_tensor
from cipherdenoise.protocol.server import InferenceServer, ServerSession
from cipherdenoise.protocol.session import (
    ClientConfig,
    PerturbanceMode,
    ServerConfig,
    SessionMetrics,
)
from cipherdenoise.protocol.transport import (
    LoopbackTransport,
    SessionResult,
    StreamServer,
    denoise_remote,
    run_linear_session,
    run_nonlinear_session,
    run_session,
)
from cipherdenoise.protocol.wire import Frame, Framework, MessageTag

__all__ = [
    "ClientConfig",
    "ClientSession",
    "Frame",
    "Framework",
    "InferenceClient",
    "InferenceServer",
    "LoopbackTransport",
    "MessageTag",
    "PerturbanceMatrix",
    "PerturbanceMode",
    "ServerConfig",
    "ServerSession",
    "SessionMetrics",
    "SessionResult",
    "SignMatrix",
    "StreamServer",
    "client_act",
    "decrypt_tensor",
    "denoise_remote",
    "run_linear_session",
    "run_nonlinear_session",
    "run_session",
    "sample_perturbance",
    "server_activate_leaky",
    "server_combine_and_activate",
    "server_perturb",
    "server_threshold_shift",
]
